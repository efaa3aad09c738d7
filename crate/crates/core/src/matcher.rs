//! Which clusters can host a job's VM.
//!
//! Memory, cores and storage are per-VM limits and never deplete; only
//! `vm_slots` is consumed as VMs boot. Placement is first-fit in
//! configuration order, so slot caps alone bound expensive clouds.

use crate::model::{Cluster, Job, ResourcePool};

/// Static part of [`fits`]: the job's VM shape is acceptable on the
/// cluster, ignoring how many slots are in use.
pub fn shape_fits(job: &Job, cluster: &Cluster) -> bool {
    cluster.cpu_archs.contains(&job.vm_cpu_arch)
        && cluster.networks.contains(&job.vm_network)
        && job.vm_mem <= cluster.memory
        && job.vm_storage <= cluster.storage
        && job.vm_cpu_cores <= cluster.cpu_cores
        && cluster.cloud_type.image_locator(job).is_some()
}

pub fn fits(job: &Job, cluster: &Cluster) -> bool {
    shape_fits(job, cluster) && (cluster.vms.len() as u64) < cluster.vm_slots as u64
}

/// Names of every cluster the job fits, in configuration order.
pub fn candidates<'a>(job: &Job, pool: &'a ResourcePool) -> Vec<&'a str> {
    pool.clusters.iter().filter(|c| fits(job, c)).map(|c| c.name.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CloudType, CpuArch, JobId, Network, QueueState, SchedState, VmRecord, VmState};

    fn job() -> Job {
        Job {
            global_job_id: JobId(1),
            user: "alice".into(),
            priority: 1,
            vmtype: "vm-name".into(),
            vm_network: Network::Private,
            vm_cpu_arch: CpuArch::X86,
            vm_name: "img".into(),
            vm_loc: "http://repository.tld/your.vm.img.gz".into(),
            vm_ami: "ami-dfasfds".into(),
            vm_mem: 512,
            vm_cpu_cores: 1,
            vm_storage: 20,
            sched_state: SchedState::New,
            queue_state: QueueState::Queued,
        }
    }

    fn cluster(name: &str) -> Cluster {
        Cluster {
            name: name.into(),
            host: format!("{name}.example"),
            cloud_type: CloudType::Simulated,
            memory: 1024,
            cpu_archs: [CpuArch::X86, CpuArch::X86_64].into(),
            networks: [Network::Private, Network::Public].into(),
            vm_slots: 10,
            cpu_cores: 2,
            storage: 100,
            vms: vec![],
        }
    }

    fn filler(c: &Cluster, i: usize) -> VmRecord {
        VmRecord {
            name: format!("vm-{i:06}"),
            id: format!("{}-{i}", c.name),
            vmtype: "x".into(),
            vmstate: VmState::Running,
            hostname: String::new(),
            clusteraddr: c.host.clone(),
            network: Network::Private,
            cpuarch: CpuArch::X86,
            image: "i".into(),
            memory: 1,
            cpucores: 1,
            storage: 0,
            errorcount: 0,
            lastpoll: 0,
            last_state_change: 0,
            owner: "o".into(),
        }
    }

    #[test]
    fn slack_cluster_fits() {
        assert!(fits(&job(), &cluster("c")));
    }

    #[test]
    fn full_cluster_does_not_fit() {
        let mut c = cluster("c");
        c.vms = (0..10).map(|i| filler(&c, i)).collect();
        assert!(!fits(&job(), &c));
        assert!(shape_fits(&job(), &c));
    }

    #[test]
    fn arch_mismatch() {
        let mut c = cluster("c");
        c.cpu_archs = [CpuArch::X86].into();
        let mut j = job();
        j.vm_cpu_arch = CpuArch::X86_64;
        assert!(!fits(&j, &c));
    }

    #[test]
    fn locator_follows_cloud_type() {
        let mut j = job();
        let mut c = cluster("c");
        c.cloud_type = CloudType::Ec2Like;
        j.vm_ami.clear();
        assert!(!fits(&j, &c));
        c.cloud_type = CloudType::Nimbus;
        assert!(fits(&j, &c));
        j.vm_loc.clear();
        j.vm_ami = "ami-1".into();
        assert!(!fits(&j, &c));
        c.cloud_type = CloudType::Simulated;
        assert!(fits(&j, &c));
    }

    #[test]
    fn candidates_keep_config_order() {
        let pool = ResourcePool::new(vec![cluster("UVic"), cluster("NRC"), cluster("EC2")]).unwrap();
        assert_eq!(candidates(&job(), &pool), ["UVic", "NRC", "EC2"]);

        let mut small = cluster("UVic");
        small.memory = 256;
        let mut nonet = cluster("NRC");
        nonet.networks = [Network::Public].into();
        let pool = ResourcePool::new(vec![small, nonet, cluster("EC2")]).unwrap();
        assert_eq!(candidates(&job(), &pool), ["EC2"]);
    }
}
